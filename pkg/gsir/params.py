import math

# renderer
cutoff_sigmas = 3.0
tile_size = 16
min_render_sigma = 0.3 # px, applied at render time only

# render loss
l1_weight = 0.7
ssim_weight = 0.3
ssim_window = 11
ssim_sigma = 1.5
ssim_k1 = 0.01
ssim_k2 = 0.03
psnr_cap = 100.0 # dB
l1_tie_tolerance = 1e-12 # |pred - target| at or below counts as a tie
ms_ssim_weights = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

# stage control
tau_psnr = 35.0 # dB
tau_ssim = 0.95
patch_size = 14
n_stages = 4
patch_sizes = (5, 6, 7, 14)

# optimizer
adam_beta1 = 0.9
adam_beta2 = 0.999
adam_eps = 1e-8
lr_mu = 5e-3 # in canvas-normalized units
lr_log_scale = 5e-3
lr_theta = 5e-3
lr_color = 1e-2
gd_lr = 1e-2 # plain gradient descent step for faithfulness runs
refine_steps = 10

# POD / finetune
distill_weight = 100.0 # multiplies the per-primitive mean; "sum" drops the 1/N
distill_reduction = "mean"
distill_attr_weights = {"mu": 1.0, "log_scale": 1.0, "theta": 0.5, "color": 1.0}
predictor_lr = 3e-4
predictor_weight_decay = 0.0
pod_steps = 2000
pod_milestones = (0, 500, 1000, 1500) # toy-scale analogue of [0, 20k, 40k, 60k]
finetune_steps = 500
finetune_lr = 2e-4

# benchmark corpus
shadow_radius = (0.5, 0.6) # fraction of the crop side

# heuristic predictor
heuristic_min_scale = 0.3 # px
heuristic_max_scale_patches = 2.0 # multiples of p

# quantization
bits = {"mu_x": 16, "mu_y": 16, "log_scale": 12, "theta": 8, "color": 8}
quant_gamma = 0.1
adaptive_percentiles = (0.5, 99.5)
adaptive_offset_bound = 0.5 # fraction of the base width
global_base = {
    "mu_x": (1.0, 0.0), # (alpha, beta), canvas-normalized
    "mu_y": (1.0, 0.0),
    "log_scale": (6.0, -1.5),
    "theta": (math.pi, 0.0),
    "color": (3.0, -1.5),
}

# bitstream
magic = b"GSIR"
format_version = 1
max_stages = 16

# weights file
weights_magic = b"GSIW"
weights_version = 1

# cli
default_seed = 0
bench_tau_grid = ((30.0, 0.90), (35.0, 0.95), (40.0, 0.98))
