"""Joint feature caching and post-training quantization for a toy denoiser.

The package splits into the schedule solver (dps), the quantizer (quant),
channel-affine error correction (dec), trajectory capture and storage
(trajectory), and an end-to-end toy pipeline that ties them together behind
the command line interface (cli).
"""

__version__ = "0.1.0"
