"""Regenerates the NIfTI-1 parser corpus.

Valid files are written with nibabel; malformed ones are byte-level edits
of a valid little-endian float32 file.

    python3 make_fixtures.py
"""
import gzip
import struct
from pathlib import Path

import nibabel as nib
import numpy as np

HERE = Path(__file__).resolve().parent
SHAPE = (4, 3, 2)
SPACING = (0.8, 1.0, 2.5)


def ramp_f32():
    # x-fastest ramp: value at (x, y, z) is 0.5 * (x + 4y + 12z) - 3
    i = np.arange(24, dtype=np.float32).reshape(SHAPE, order="F")
    return i * np.float32(0.5) - np.float32(3.0)


def ramp_i16():
    return (np.arange(24, dtype=np.int16) * 7 - 80).reshape(SHAPE, order="F")


def save(name, data, endian="<", extension=False):
    hdr = nib.Nifti1Header(endianness=endian)
    img = nib.Nifti1Image(data, np.diag([*SPACING, 1.0]), header=hdr)
    img.header.set_zooms(SPACING)
    img.header.set_xyzt_units("mm")
    img.set_data_dtype(data.dtype)
    if extension:
        img.header.extensions.append(nib.nifti1.Nifti1Extension("comment", b"desk-scale fixture"))
    nib.save(img, HERE / name)


def scaled(src, name, endian, slope, inter):
    # nibabel recomputes scaling on save, so the fields are patched in place
    b = bytearray((HERE / src).read_bytes())
    b[112:120] = struct.pack(endian + "ff", slope, inter)
    (HERE / name).write_bytes(bytes(b))


def edit(src, name, patch):
    b = bytearray((HERE / src).read_bytes())
    patch(b)
    (HERE / name).write_bytes(bytes(b))


def main():
    save("le_float32.nii", ramp_f32(), "<")
    save("be_float32.nii", ramp_f32(), ">")
    save("le_int16.nii", ramp_i16(), "<")
    save("be_int16.nii", ramp_i16(), ">")
    scaled("le_int16.nii", "le_int16_scaled.nii", "<", 2.0, -1.0)
    scaled("be_int16.nii", "be_int16_scaled.nii", ">", 2.0, -1.0)
    save("le_float32_extension.nii", ramp_f32(), "<", extension=True)

    src = "le_float32.nii"
    edit(src, "bad_truncated_header.nii", lambda b: b.__delitem__(slice(200, None)))
    edit(src, "bad_truncated_data.nii", lambda b: b.__delitem__(slice(len(b) - 10, None)))
    edit(src, "bad_magic_pair.nii", lambda b: b.__setitem__(slice(344, 348), b"ni1\0"))
    edit(src, "bad_sizeof_hdr.nii", lambda b: b.__setitem__(slice(0, 4), struct.pack("<i", 540)))
    edit(src, "bad_uint8_datatype.nii", lambda b: b.__setitem__(slice(70, 74), struct.pack("<hh", 2, 8)))
    edit(src, "bad_bitpix.nii", lambda b: b.__setitem__(slice(72, 74), struct.pack("<h", 16)))
    edit(src, "bad_dim0.nii", lambda b: b.__setitem__(slice(40, 42), struct.pack("<h", 4)))
    edit(src, "bad_zero_extent.nii", lambda b: b.__setitem__(slice(44, 46), struct.pack("<h", 0)))
    edit(src, "bad_vox_offset.nii", lambda b: b.__setitem__(slice(108, 112), struct.pack("<f", 100.0)))
    (HERE / "bad_gzip.nii.gz").write_bytes(gzip.compress((HERE / src).read_bytes(), mtime=0))


if __name__ == "__main__":
    main()
