"""White listing of IoT device types from TCP session traffic."""

__version__ = "0.1.0"
