"""Tests for the spectrum foundation model toolkit"""
