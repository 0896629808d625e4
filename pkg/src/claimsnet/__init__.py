"""claimsnet: a simulated claims exchange network for Travel Rule compliance.

Data providers run vetted algorithms next to their data, claims providers
turn the results into signed claims, key registries attest key ownership, and
VASPs exchange Travel Rule packets under countersigned receipts. Everything
runs on a deterministic message bus (:mod:`claimsnet.network_sim`).
"""

from .envelope import KeyDirectory, KeyPair, PayloadType, SignedEnvelope, canonicalize, seal, verify

__version__ = "0.1.0"

__all__ = ["KeyDirectory", "KeyPair", "PayloadType", "SignedEnvelope", "canonicalize", "seal", "verify"]
