"""
Coding an image and looking inside a .dic file
===============================================

An untrained codec is enough to follow the data path end to end. We
tile an image, binarise each tile's latent code, pack the bits and decode
them again. We also check the rate: half a bit per pixel when the sides
are multiples of 32, more once padding tiles have to be paid for.
Reconstruction quality means nothing until the codec has been trained
(see the third script).
"""

import numpy as np

from discernible.bitstream import HEADER_SIZE, pack, read_header, unpack
from discernible.codec import CodecArch, CodecModel, compress_image, decompress_image
from discernible.data import CLASS_NAMES, render
from discernible.metrics import bpp, ms_ssim, psnr

rng = np.random.default_rng(0)

full = render(CLASS_NAMES.index("rings"), 128, rng)[:96, :128]
model = CodecModel(CodecArch(widths=(32, 64), latent_channels=32, max_steps=2, seed=0)).eval()

###############################################################################
# One step: 4x4 grid x 32 channels = 512 bits per 32x32 tile. A 96x128
# image is 12 whole tiles, so the rate is exactly 0.5 bpp (48x below raw RGB).

codes = compress_image(model, full, steps=1)
print(len(codes), "tiles,", codes[0].n_bits, "bits each, rate", bpp(codes, 96, 128), "bpp")

###############################################################################
# Now crop to 70x100. Neither side is a multiple of 32, so the codec
# reflect-pads back up to 96x128 and the header remembers the true size.
# The padded tiles still cost bits, and bpp counts true pixels only.

image = full[:70, :100]
codes = compress_image(model, image, steps=1)
print(len(codes), "tiles for", image.shape[:2], "-> rate", round(bpp(codes, 70, 100), 4), "bpp")

blob = pack(codes, image.shape[:2])
hdr = read_header(blob)
print("header", blob[:HEADER_SIZE].hex(" "))
print(hdr)
print("file size", len(blob), "bytes; raw RGB would be", 70 * 100 * 3)

print("payload bits / true pixels =", round((len(blob) - HEADER_SIZE) * 8 / (70 * 100), 4))

decoded_codes, (h, w), padded = unpack(blob)
assert decoded_codes == codes
recon = decompress_image(model, decoded_codes, h, w)
print("decoded", recon.shape, "padded", padded)

###############################################################################
# With two residual steps the rate doubles. An untrained decoder does not
# yet turn the extra bits into quality.

for steps in (1, 2):
    c = compress_image(model, image, steps)
    y = decompress_image(model, c, 70, 100)
    print(f"steps={steps}: {bpp(c, 70, 100):.2f} bpp, PSNR {psnr(image, y):.2f} dB, "
          f"MS-SSIM(3 scales) {ms_ssim(image, y, 3):.3f}")
