"""Dynamic feature compression for remote CartPole control.

A desk-scale simulator and library: an observer encodes noisy plant
observations with an ensemble of vector quantizers at selectable bit depths,
a learned policy chooses the quantizer (or stays silent) under a per-byte
cost, and a recurrent actor-critic robot controls the plant from the
received messages.
"""

__version__ = "0.1.0"
