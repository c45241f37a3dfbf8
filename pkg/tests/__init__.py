"""Tests for the massive-access URLLC simulator."""
