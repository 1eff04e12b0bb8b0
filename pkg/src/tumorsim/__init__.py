"""Multiphase tumor growth simulator: penalized Brinkman flow, cell
transport, nutrient/drug diffusion, and level-set domain tracking on a
fixed reference box."""

__version__ = "0.1.0"
