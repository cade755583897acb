"""Configuration schemas and data records"""
