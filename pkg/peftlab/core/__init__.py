"""Engine modules: numerics, model, methods, data, metrics and runner."""
