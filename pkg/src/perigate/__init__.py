"""Two-region perimeter gating workbench.

Simulates gated transfer flow between an inner and an outer urban region,
each governed by a macroscopic fundamental diagram, and compares four
control strategies (no control, receding-horizon MPC over averaged demand
history, a baseline actor-critic learner, and a derivative-aware learner
with a redundancy-shaped reward) under demand and MFD disruptions.
"""

__version__ = "0.1.0"
