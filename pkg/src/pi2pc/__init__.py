"""Two-party secure DNN inference with an analytic operator latency model
and latency-aware architecture search."""

from .ring import FixedTensor, RingConfig, decode, encode
from .sharing import BeaverPair, BeaverTriple, Dealer, Share, TripleStore, rec, shr
from .transport import Channel, DelayModel, Transcript, inproc_pair

__version__ = "0.1.0"

__all__ = [
    "FixedTensor", "RingConfig", "decode", "encode",
    "BeaverPair", "BeaverTriple", "Dealer", "Share", "TripleStore", "rec", "shr",
    "Channel", "DelayModel", "Transcript", "inproc_pair",
]
