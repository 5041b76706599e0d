"""Integration tests for Put-Away Wizard."""

