"""Experiment layer: configuration, training driver and sweep workers"""
