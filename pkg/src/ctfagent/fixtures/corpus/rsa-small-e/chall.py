from Crypto.Util.number import bytes_to_long, getPrime

FLAG = open("flag.txt", "rb").read().strip()
p, q = getPrime(512), getPrime(512)
n, e = p * q, 3
print(f"n = {n}")
print(f"e = {e}")
print(f"c = {pow(bytes_to_long(FLAG), e, n)}")
