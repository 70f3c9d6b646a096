"""Tests for CI/CD Failure Monitor"""
