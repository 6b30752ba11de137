"""Metro ridership forecasting with physical and virtual station graphs."""

__version__ = "0.1.0"
