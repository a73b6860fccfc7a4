# -*- coding: utf-8 -*-

"""Top-level package for the URLLC power and bandwidth allocator."""

__author__ = """URLLC allocator developers"""
__version__ = "0.1.0"
