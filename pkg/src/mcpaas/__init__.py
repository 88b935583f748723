"""Multi-cloud PaaS control plane on a deterministic simulated cloud fabric."""

__version__ = "0.1.0"
