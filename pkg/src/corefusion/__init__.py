"""Guided thermal super-resolution with max-fused dual encoders and contrastive regularisation."""
