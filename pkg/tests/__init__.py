"""Test suite for the eaaw package."""
