"""Cross-domain offline RL with k-NN gap scoring and score-guided diffusion augmentation."""
