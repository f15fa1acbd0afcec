"""Multi-score no-reference quality assessment for stereoscopic images,
built on a small numpy autodiff engine."""
from .autodiff import Parameter, SgdConfig, Tensor, backward, no_grad, sgd_step
from .data import DatasetManifest, PatchBatch, SplitPlan, StereoSample, generate_synthetic, load_manifest, make_split
from .harness import TrainConfig, cross_database, evaluate, multiscore_loss, run_protocol, score_image, train
from .metrics import EvalReport, plcc, rmse, srocc
from .model import MultiScoreNet, ScoreQuad, build_network, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
