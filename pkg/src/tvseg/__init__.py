"""TV-regularized activation layers for semantic segmentation, a miniature
trainable encoder-decoder network, synthetic data, metrics and experiment
tooling."""

from .activations import (RegActConfig, post_tv, reg_relu_iterative,
                          reg_softmax_iterative, reg_softmax_onestep, relu,
                          softmax)
from .backward import (GradReport, finite_diff_check, lambda_gradient,
                       reg_softmax_onestep_backward,
                       reg_softmax_unrolled_backward, softmax_jvp,
                       update_lambda)
from .grid import div, grad, project_unit_disc, tv_value
from .metrics import (MetricsRow, confusion_matrix, global_accuracy, miou,
                      miou_from_confusion, regularization_effect)
from .net import (MiniUnet, NetSpec, ParamSet, TrainLog, build, cross_entropy,
                  forward, load_checkpoint, predict, save_checkpoint,
                  sgd_momentum_step, train)
from .synth import (Sample, add_gaussian_noise, add_salt_pepper,
                    corrupt_training_subset, generate_cells, load_dataset,
                    read_pgm, read_ppm, save_dataset, write_pgm, write_ppm)

__all__ = [name for name in dir() if not name.startswith("_")]
