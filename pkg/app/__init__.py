"""FDDM dose prediction toolkit"""
