"""Foveated active vision: sunflower sensors, graph convolutions on irregular
lattices, and sequential fixation classifiers trained end to end."""

from ._tuneup import tune_allocator as _tune_allocator

_tune_allocator()

from .lattice import (LatticeSpec, SamplingLattice, logpolar_lattice,  # noqa: E402
                      make_lattice, multifov_lattice, subsample_lattice,
                      sunflower_lattice, uniform_lattice)
from .graph import (BasisTensor, NeighborGraph, build_graph,  # noqa: E402
                    evaluate_basis, hermite)
from .sampler import Fixation, FoveatedImage, Image, render, sample, sample_vjp  # noqa: E402
from .gconv import GConvLayer, gconv_forward, gconv_vjp, init_layer  # noqa: E402
from .nn import (BatchNormState, OptimizerState, Tape, Var, adamw_step,  # noqa: E402
                 batchnorm, dense, global_average_pool, lr_at, relu,
                 softmax_cross_entropy)
from .attention import AttentionHead, attend, random_policy  # noqa: E402
from .model import (FoveatedClassifier, FixationTrace, ModelConfig,  # noqa: E402
                    TrainSettings, evaluate, load, save, train)
from .data import DatasetSpec, batches, load_idx, make_variant, split  # noqa: E402

__version__ = "0.1.0"
