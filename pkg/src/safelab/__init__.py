"""Desk-scale laboratory for offline-to-online constrained reinforcement learning.

The package covers the full pipeline: conservative offline pretraining on a
logged dataset, value re-alignment of the pretrained critics, and online
actor-critic finetuning whose cost constraint is enforced by a Lagrange
multiplier driven by dual ascent, PID, or adaptive PID control. Two small
built-in environments and exact tabular solvers make every stage testable
against ground truth.
"""

__version__ = "0.1.0"
