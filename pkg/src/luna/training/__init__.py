"""Optimizer, synthetic tasks, the toy transformer and the experiments that train it."""
