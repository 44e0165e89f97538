"""Utility package for mutadetect."""
