"""Transforms, networks, training and evaluation"""
