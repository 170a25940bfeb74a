"""Particle estimators for measure derivatives of McKean-Vlasov semigroups."""

__version__ = "0.1.0"
