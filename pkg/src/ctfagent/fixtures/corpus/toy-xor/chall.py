import os

FLAG = open("flag.txt", "rb").read().strip()
KEY = os.urandom(1)[0]

print(bytes(b ^ KEY for b in FLAG).hex())
