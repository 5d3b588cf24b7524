"""Desk-scale lab for training and evaluating DIN and MSNet CTR models
on a synthetic limited-stock (C2C) marketplace."""

__version__ = "0.1.0"
