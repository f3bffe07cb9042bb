"""Feed-forward Gaussian-splatting novel view synthesis."""
