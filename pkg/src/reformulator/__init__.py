"""RL fine-tuning of sequence-to-sequence query reformulators at desk scale."""
