"""Layered-escrow onion circuits with a translucent oversight ledger.

Subpackages and modules mirror the protocol surface: crypto (threshold and
signature primitives), certs (temporal address certificates), cells and
circuit (wire framing plus circuit establishment), flowstore (exit-side flow
records and their migration), ledger (consortium voting and state proofs),
deanon (the peel pipeline), probing (exit compliance probes), and sim (the
deterministic harness behind the CLI).
"""

__version__ = "0.1.0"
