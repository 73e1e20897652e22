"""Deterministic federated-learning simulator with dynamic sparse training."""

from .comm import (BFLOAT16, FLOAT32, CommLedger, Quantizer, bf16_truncate,
                   closed_form_average, flops_forward, meter_dense_transfer,
                   meter_sparse_transfer)
from .data import (ClientShard, Dirichlet, LabeledDataset, Pathological, load_cifar10_bin,
                   load_idx, load_synthetic, partition_dirichlet, partition_pathological,
                   save_synthetic, synthetic_blobs)
from .nn import (Conv2d, Flatten, Linear, MaxPool, Network, OptimizerState, ReLU,
                 build_model, finite_diff_grads, forward, loss_and_backward, make_mlp,
                 sgd_step)
from .protocol import (AlgorithmConfig, ClientUpdate, RoundMetrics, ServerState, SparseModel,
                       aggregate_dense, aggregate_sparse, client_update, evaluate,
                       evaluate_per_client, run_experiment, run_round, sample_clients,
                       server_finalize)
from .sparsity import (Mask, ReadjustmentSchedule, SparsityDistribution, cosine_alpha,
                       erk_distribution, grow_gradient_magnitude, prune_layerwise, readjust,
                       uniform_distribution)

__version__ = "0.1.0"
