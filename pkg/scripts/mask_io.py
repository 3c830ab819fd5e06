"""掩码文件的读写

格式: 4 字节魔数 b"SEVM" | 1 字节版本号 | 4 字节小端头部长度 | UTF-8 JSON 头部 | 位图负载
头部记录每层的名字、形状、密度以及负载中的字节偏移；位图由 numpy.packbits 按行主序打包。
"""
import hashlib
import json
import os
import struct
from typing import List, Optional, Sequence, Tuple

import numpy as np

from scripts.errors import ContractError

MAGIC = b"SEVM"
VERSION = 1


def pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(mask.reshape(-1).astype(bool)).tobytes()


def support_hash(mask: np.ndarray) -> str:
    """掩码支撑集的 64 位哈希（16 位十六进制）"""
    payload = struct.pack('<I', mask.size) + pack_mask(mask)
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def save_masks(path: str, masks: Sequence[np.ndarray], names: Optional[Sequence[str]] = None) -> str:
    names = list(names) if names is not None else [f"layer{i}" for i in range(len(masks))]
    payloads, layers, offset = [], [], 0
    for name, mask in zip(names, masks):
        packed = pack_mask(mask)
        layers.append({
            "name": name,
            "shape": list(mask.shape),
            "density": float(mask.sum() / mask.size),
            "nonzero": int(mask.sum()),
            "offset": offset,
            "nbytes": len(packed),
        })
        payloads.append(packed)
        offset += len(packed)

    header = json.dumps({"layers": layers}, sort_keys=True, separators=(",", ":")).encode('utf-8')
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<BI', VERSION, len(header)))
        f.write(header)
        for packed in payloads:
            f.write(packed)
    return path


def load_masks(path: str) -> Tuple[List[np.ndarray], List[dict]]:
    """读取掩码文件

    Returns:
        (掩码列表, 头部中的逐层信息)
    """
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ContractError(f"不是掩码文件: {path}")
    version, header_len = struct.unpack('<BI', data[4:9])
    if version != VERSION:
        raise ContractError(f"不支持的掩码文件版本: {version}")
    header = json.loads(data[9:9 + header_len].decode('utf-8'))
    payload = data[9 + header_len:]

    masks = []
    for layer in header["layers"]:
        count = int(np.prod(layer["shape"]))
        chunk = np.frombuffer(payload[layer["offset"]:layer["offset"] + layer["nbytes"]], dtype=np.uint8)
        bits = np.unpackbits(chunk, count=count)
        masks.append(bits.astype(np.float64).reshape(layer["shape"]))
    return masks, header["layers"]
