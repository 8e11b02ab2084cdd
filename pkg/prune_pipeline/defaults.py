from pathlib import Path

_curr_file = Path(__file__)
_curr_dir: Path = _curr_file.parent

project_root: Path = _curr_dir.parent.absolute()
data_dir = project_root.joinpath("data")

cifar10_dir = data_dir.joinpath("cifar-10-batches-bin")

# checkpoint file format
checkpoint_magic = b"PFGDF1"
checkpoint_format_version = 2

# batchnorm
bn_eps = 1e-5
bn_momentum = 0.1

# training (CIFAR protocol)
epochs = 160
batch_size = 64
lr = 0.1
lr_drop_points = (0.5, 0.75)
lr_drop_factor = 0.1
momentum = 0.9
weight_decay = 1e-4

# pruning
alpha_grid = (0.3, 0.5, 0.8, 1.0, 1.5, 2.0, 2.5, 3.0)
max_rollbacks = 2

# analysis and reporting
hist_bins = 20
eval_batch_size = 256
report_version = 1

# synthetic dataset
synth_noise = 0.3
synth_n_train = 512
synth_n_eval = 256
synth_classes = 4
synth_size = 16

# CIFAR-10 per-channel statistics on the [0, 1] pixel scale
cifar10_mean = (0.4914, 0.4822, 0.4465)
cifar10_std = (0.2470, 0.2435, 0.2616)
