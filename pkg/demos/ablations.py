"""
Which blocks, and how much data
===============================

The block-set grid and the training-fraction grid on one synthetic
category. Takes a couple of minutes: ten short trainings.
"""
from pyramid_distill import SynthSpec, TrainConfig, generate_synthetic, pretrain_toy_teacher
from pyramid_distill.datasets import default_texture_classes
from pyramid_distill.metrics import ablation_table
from pyramid_distill.pipeline import run_block_ablation, run_fraction_ablation

archive = pretrain_toy_teacher(default_texture_classes(64, seed=0), epochs=8, seed=0)
category = generate_synthetic(SynthSpec(seed=1))
config = TrainConfig(learning_rate=0.4, epochs=20, batch_size=8, input_size=64)

print(ablation_table(run_block_ablation([category], archive, config), "Blocks"))
# block 5 has 4x4 resolution on 64-pixel input: coarse maps localize poorly

print(ablation_table(run_fraction_ablation([category], archive, config), "Fraction"))
