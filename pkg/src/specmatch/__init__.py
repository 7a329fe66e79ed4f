"""Matrix completion by residual spectral matching."""
