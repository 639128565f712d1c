"""Self-hostable real-time chat platform for communication research:
quasi-synchronous and synchronous modes, configurable typing indicators,
keystroke/mouse telemetry attached to every message, identity
masquerading for wizard-of-oz studies, in-place annotation, and
deterministic structured export of complete sessions."""

__version__ = "0.1.0"
