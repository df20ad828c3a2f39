"""
Packing trits and multiplying without multiplications
=====================================================

Five trits fit in one byte (3**5 = 243 <= 256).  The kernel walks the packed
rows and only adds or subtracts 8-bit activation codes.
"""

import numpy as np

from ternvit.trit_pack import OpCounter, pack, packed_size_report, ternary_matmul, unpack
from ternvit.vit import VitConfig, weight_entries

row = pack([[-1, 0, 1, 1, -1]])
print("[-1, 0, 1, 1, -1] packs to byte", row.data[0, 0])  # digits 0,1,2,2,0 -> 75
print("unpacked again:", unpack(row)[0])

w = pack([[1, -1, 0], [0, 1, 1]])
counter = OpCounter()
out = ternary_matmul(w, np.array([[3, -2, 5]], dtype=np.int8), counter)
print("product:", out[0], "ops:", counter)  # [5, 3]; mults=0

# Exact against a dense integer product.
rng = np.random.default_rng(1)
trits = rng.integers(-1, 2, (64, 300)).astype(np.int8)
codes = rng.integers(-127, 128, (8, 300)).astype(np.int8)
dense = codes.astype(np.int64) @ trits.T
print("matches dense:", np.array_equal(ternary_matmul(pack(trits), codes), dense))

# Storage of the ViT-L encoder: every linear layer packed, one fp32 beta each.
encoder = [e for e in weight_entries(VitConfig.preset("large")) if e[3] == "ternary"]
report = packed_size_report(encoder)
print(f"ViT-L encoder: {report.fp32_bytes / 2**30:.2f} GiB fp32 -> {report.packed_bytes / 2**20:.1f} MiB packed, "
      f"{report.ratio:.1f}x smaller")
