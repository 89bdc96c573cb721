"""Reversible information-obfuscation attacks on a toy CTC speech recognizer.

Pipeline: synthesize or load audio, pick influential words, choose low-loss
replacement targets, run the cumulative-signal attack over the word spans,
embed the perturbation losslessly into the adversarial clip, and recover
near-original audio on demand.
"""

from .audio import AudioClip, load_wav, save_wav, quantize16, dequantize16

__all__ = ["AudioClip", "load_wav", "save_wav", "quantize16", "dequantize16"]
