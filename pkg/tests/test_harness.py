import numpy as np
import pytest

from stereoscore import autodiff as ad
from stereoscore.autodiff import SgdConfig, Tensor
from stereoscore.data import encode_ppm, generate_synthetic, make_split, tile_pair
from stereoscore.errors import ConfigError, DimensionError, TrainingError, UndefinedCorrelationError
from stereoscore.harness import (
    TrainConfig,
    cross_database,
    evaluate,
    initial_network,
    multiscore_loss,
    pool_patches,
    run_protocol,
    score_image,
    train,
)
from stereoscore.model import ScoreQuad, ScoreTensors, build_network


def _scores(g, s, l, r, n=1):
    col = lambda v: Tensor(np.full((n, 1), v, dtype=np.float64), requires_grad=True, dtype=np.float64)
    return ScoreTensors(col(l), col(r), col(s), col(g))


LABELS = np.array([[40.0, 40.0, 40.0]])


# --- loss ----------------------------------------------------------------------------

def test_loss_hand_values():
    q = _scores(50, 45, 42, 41)
    assert multiscore_loss(q, LABELS).item() == pytest.approx(28.0, abs=1e-6)
    assert multiscore_loss(q, LABELS, "no_lr_mos").item() == pytest.approx(25.0, abs=1e-6)
    assert multiscore_loss(q, LABELS, "no_global_score").item() == pytest.approx(8.0, abs=1e-6)
    assert multiscore_loss(_scores(40, 40, 40, 40), LABELS).item() == 0.0


@pytest.mark.parametrize("slot,weight", [(0, 2.0), (1, 1.0), (2, 1.0), (3, 1.0)])
def test_loss_weights_by_perturbation(slot, weight):
    base = [40.0, 40.0, 40.0, 40.0]
    bumped = list(base)
    bumped[slot] += 3.0
    delta = multiscore_loss(_scores(*bumped), LABELS).item() - multiscore_loss(_scores(*base), LABELS).item()
    assert delta == pytest.approx(3.0 * weight, abs=1e-9)


def test_loss_permutation_invariant():
    rng = np.random.default_rng(0)
    vals = rng.uniform(10, 100, (4, 8))
    labels = rng.uniform(10, 100, (8, 3))
    perm = rng.permutation(8)
    mk = lambda v: ScoreTensors(*(Tensor(v[i][:, None], dtype=np.float64) for i in range(4)))
    a = multiscore_loss(mk(vals), labels).item()
    b = multiscore_loss(mk(vals[:, perm]), labels[perm]).item()
    assert a == pytest.approx(b, abs=1e-10)


def test_loss_errors():
    with pytest.raises(DimensionError):
        multiscore_loss(_scores(1, 1, 1, 1, n=2), LABELS)
    with pytest.raises(ConfigError):
        multiscore_loss(_scores(1, 1, 1, 1), LABELS, "nope")


# --- gradient flow under the ablations -------------------------------------------------

@pytest.fixture(scope="module")
def batch():
    rng = np.random.default_rng(1)
    left = rng.integers(0, 256, (4, 3, 32, 32)).astype(np.float32)
    right = rng.integers(0, 256, (4, 3, 32, 32)).astype(np.float32)
    labels = np.array([[90, 20, 30], [15, 80, 40], [50, 50, 50], [70, 60, 62]], dtype=np.float32)
    return left, right, labels


def _grads(mode, batch):
    left, right, labels = batch
    net = build_network(5)
    net.zero_grad()
    q = net.forward(left, right, with_global=mode != "no_global_score")
    multiscore_loss(q, labels, mode).backward()
    return {n: p.grad for n, p in net.params.items()}


def test_full_mode_reaches_every_parameter(batch):
    for name, g in _grads("full", batch).items():
        assert np.abs(g).sum() > 0, name


def test_no_lr_mos_zeroes_per_view_heads_only(batch):
    grads = _grads("no_lr_mos", batch)
    for name, g in grads.items():
        if name.startswith(("left/score/", "right/score/")):
            assert np.all(g == 0), name
        else:
            assert np.abs(g).sum() > 0, name


def test_no_global_score_leaves_global_head_alone(batch):
    grads = _grads("no_global_score", batch)
    for name, g in grads.items():
        if name.startswith("global/"):
            assert np.all(g == 0), name
        else:
            assert np.abs(g).sum() > 0, name


def test_single_sample_step_decreases_loss(batch):
    left, right, labels = batch
    net = build_network(2)
    net.zero_grad()
    loss0 = multiscore_loss(net.forward(left[:1], right[:1]), labels[:1])
    before = loss0.item()
    loss0.backward()
    ad.sgd_step(net.parameters(), SgdConfig(learning_rate=1e-7, momentum=0.0, weight_decay=0.0))
    with ad.no_grad():
        after = multiscore_loss(net.forward(left[:1], right[:1]), labels[:1]).item()
    assert after < before


# --- training ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    """Two scenes of 32x32 pairs: one patch per image, 14 images."""
    return generate_synthetic(tmp_path_factory.mktemp("tiny"), scenes=2, levels=2, width=32, height=32, seed=2)


@pytest.fixture(scope="module")
def tiny_b(tmp_path_factory):
    return generate_synthetic(tmp_path_factory.mktemp("tinyb"), scenes=2, levels=2, width=64, height=32,
                              seed=3, name="other")


def test_train_deterministic(tiny):
    plan = make_split(tiny, 0.5, 0, 0)
    cfg = TrainConfig(epochs=2, seed=4)
    a, b = train(tiny, plan, cfg), train(tiny, plan, cfg)
    assert a.losses == b.losses and len(a.losses) == 2
    assert a.net.digest() == b.net.digest()


def test_zero_epochs_keeps_initial_network(tiny):
    plan = make_split(tiny, 0.5, 0, 0)
    rec = train(tiny, plan, TrainConfig(epochs=0, seed=4))
    assert rec.losses == []
    assert rec.net.digest() == initial_network(4, pool_patches(tiny.by_id(plan.train_ids)).labels).digest()


def test_initial_network_anchors_output_biases():
    labels = np.array([[90, 10, 20], [50, 30, 40], [10, 70, 80]], dtype=np.float32)
    net = initial_network(0, labels)
    assert net["left/score/fc/bias"].data[0] == 50
    assert net["right/score/fc/bias"].data[0] == 30
    assert net["stereo/score/fc/bias"].data[0] == 40
    assert net["global/LBconct/fc2/bias"].data[0] == 40
    plain = build_network(0)
    for name, p in net.params.items():
        if not name.endswith(("score/fc/bias", "fc2/bias")):
            assert np.array_equal(p.data, plain[name].data), name


def test_final_short_batch_is_used(tiny):
    plan = make_split(tiny, 0.5, 0, 0)
    cfg = TrainConfig(epochs=1, seed=1, sgd=SgdConfig(batch_size=4))
    rec = train(tiny, plan, cfg)
    # 7 training patches in batches of 4 + 3; the history is one sample-weighted mean
    assert len(rec.losses) == 1 and np.isfinite(rec.losses[0])


def test_no_global_score_leaves_global_head_at_init(tiny):
    plan = make_split(tiny, 0.5, 0, 0)
    rec = train(tiny, plan, TrainConfig(epochs=2, seed=3, ablation_mode="no_global_score"))
    init = initial_network(3, pool_patches(tiny.by_id(plan.train_ids)).labels)
    for name in init.params:
        same = np.array_equal(init[name].data, rec.net[name].data)
        assert same == name.startswith("global/"), name


def test_non_finite_training_names_epoch_and_batch(tiny):
    plan = make_split(tiny, 0.5, 0, 0)
    cfg = TrainConfig(epochs=3, seed=0, sgd=SgdConfig(learning_rate=1e30, momentum=0.0, weight_decay=0.0))
    with pytest.raises(TrainingError, match=r"epoch \d+, batch \d+"):
        train(tiny, plan, cfg)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, ablation_mode="bogus")
    assert TrainConfig(epochs=4, lr_step_epochs=2).learning_rate(3) == pytest.approx(1e-4)
    assert TrainConfig(epochs=4).learning_rate(3) == 1e-3


def test_run_record_files(tiny, tmp_path):
    plan = make_split(tiny, 0.5, 0, 0)
    rec = train(tiny, plan, TrainConfig(epochs=1, seed=0), out_dir=tmp_path)
    for f in ("config.txt", "split.csv", "loss.csv", "model.msqa"):
        assert (tmp_path / f).is_file(), f
    cfg = dict(line.split("=", 1) for line in (tmp_path / "config.txt").read_text().splitlines())
    assert (cfg["lr"], cfg["momentum"], cfg["weight_decay"], cfg["batch_size"]) == ("0.001", "0.9", "0.0001", "128")
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "epoch,mean_loss"
    assert rec.checkpoint == tmp_path / "model.msqa"


# --- evaluation ----------------------------------------------------------------------

def _stub(values):
    return lambda s: ScoreQuad(*(values(s),) * 4)


def test_perfect_stub_scores_one(tiny):
    rep = evaluate(None, tiny, scorer=_stub(lambda s: s.mos_stereo))
    assert rep.srocc == pytest.approx(1.0) and rep.plcc == pytest.approx(1.0) and rep.rmse == 0.0
    assert rep.rows[0].n == len(tiny)


def test_constant_stub_raises(tiny):
    with pytest.raises(UndefinedCorrelationError):
        evaluate(None, tiny, scorer=_stub(lambda s: 50.0))


def test_evaluate_uses_test_side_only_and_reported_score(tiny):
    plan = make_split(tiny, 0.5, 0, 0)
    rep = evaluate(None, tiny, plan, scorer=_stub(lambda s: s.mos_stereo))
    assert {p[0] for p in rep.predictions} == set(plan.test_ids)
    stereo_only = lambda s: ScoreQuad(0.0, 0.0, s.mos_stereo, 50.0)
    assert evaluate(None, tiny, plan, "no_global_score", scorer=stereo_only).srocc == pytest.approx(1.0)


def test_evaluate_leaves_network_untouched_and_threads_agree(tiny):
    net = build_network(8)
    digest = net.digest()
    a = evaluate(net, tiny)
    b = evaluate(net, tiny, threads=3)
    assert net.digest() == digest
    assert a.rows == b.rows and a.predictions == b.predictions


def test_run_protocol_single_repeat_and_mean(tiny, tmp_path):
    cfg = TrainConfig(epochs=1, seed=0)
    rep = run_protocol(tiny, 0.5, 2, cfg, tmp_path, threads=1)
    assert len(rep.rows) == 2
    assert rep.srocc == pytest.approx(sum(r.srocc for r in rep.rows) / 2, abs=1e-12)
    assert (tmp_path / "report.csv").is_file() and (tmp_path / "repeat_01" / "model.msqa").is_file()
    for plan in rep.splits:
        assert not set(plan.train_scenes) & set(plan.test_scenes)
    one = run_protocol(tiny, 0.5, 1, cfg)
    assert one.mean.srocc == one.rows[0].srocc
    with pytest.raises(ConfigError):
        run_protocol(tiny, 0.5, 0, cfg)


def test_cross_database(tiny, tiny_b):
    cfg = TrainConfig(epochs=1, seed=0)
    ab = cross_database(tiny, tiny_b, cfg)
    ba = cross_database(tiny_b, tiny, cfg)
    assert ab.rows[0].partition == "crossdb"
    assert len(ab.records[0].split.train_ids) == len(tiny)
    assert {p[0] for p in ab.predictions} == {s.id for s in tiny_b}
    assert not {p[0] for p in ab.predictions} & {p[0] for p in ba.predictions}
    with pytest.raises(ConfigError):
        cross_database(tiny, tiny, cfg)


# --- single-pair scoring -------------------------------------------------------------

def test_score_single_patch_pair_matches_forward(tmp_path):
    rng = np.random.default_rng(3)
    left = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    right = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    encode_ppm(tmp_path / "l.ppm", left)
    encode_ppm(tmp_path / "r.ppm", right)
    net = build_network(1)
    quad, n = score_image(net, tmp_path / "l.ppm", tmp_path / "r.ppm")
    assert n == 1
    b = tile_pair("x", left, right, (50, 50, 50))
    expected = net.predict(b.left.astype(np.float32), b.right.astype(np.float32))[0]
    assert (quad.q_left, quad.q_right, quad.q_stereo, quad.q_global) == tuple(float(v) for v in expected)
    assert score_image(net, tmp_path / "l.ppm", tmp_path / "r.ppm") == (quad, n)


def test_score_mismatched_sizes(tmp_path):
    encode_ppm(tmp_path / "l.ppm", np.zeros((32, 64, 3), np.uint8))
    encode_ppm(tmp_path / "r.ppm", np.zeros((64, 32, 3), np.uint8))
    with pytest.raises(DimensionError, match="64x32.*32x64"):
        score_image(build_network(0), tmp_path / "l.ppm", tmp_path / "r.ppm")
