"""Tests for the gpvit-desk package"""
