"""Numpy CNN regression stack with hand-written backpropagation."""
