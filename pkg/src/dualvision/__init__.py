"""Dual-vision (frame + scene) captioning at desk scale."""
