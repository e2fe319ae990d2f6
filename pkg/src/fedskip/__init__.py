"""Layer-skipping federated fine-tuning simulator.

A small transformer with exact manual backpropagation, a FedAvg-style
round loop that trains and communicates only a chosen top slice of
layers, DP-SGD on the trainable gradients, simulated secure aggregation
over fixed-point masked updates, synthetic clinical-style tasks, and a
bit-exact wire codec for communication accounting.
"""

__version__ = "0.1.0"
