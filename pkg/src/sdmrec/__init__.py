"""Signed-distance recommenders (SDP, SDM, SDMR) with BPR training and leave-one-out evaluation."""

__version__ = "0.1.0"
