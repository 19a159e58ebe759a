"""Group-sequential design and analysis of covariate-adjusted restricted
mean survival time comparisons between two trial arms."""

from __future__ import annotations

__version__ = "0.1.0"
