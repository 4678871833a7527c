"""Container format, synthetic data, experiment runner and command line."""
