"""Encrypts each input line with a fixed keystream and prints it as hex."""
import hashlib
import sys

KEYSTREAM = hashlib.sha256(b"keystream-reuse fixture").digest()

print("keystream oracle ready: send a line (max 32 bytes)", flush=True)
for line in sys.stdin:
    data = line.rstrip("\n").encode()[:32]
    print(bytes(a ^ b for a, b in zip(data, KEYSTREAM)).hex(), flush=True)
