"""MADDPG with intrinsic curiosity and a Go-Explore exploration phase on a predator-prey particle world."""

__version__ = "0.1.0"
