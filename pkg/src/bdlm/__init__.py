"""Block diffusion language models: conversion from AR, post-training and parallel decoding."""

__version__ = "0.1.0"
