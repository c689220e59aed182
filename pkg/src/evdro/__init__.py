"""Distributionally robust EV fleet balancing."""
