"""Test suite for ovseg3r-prep."""
