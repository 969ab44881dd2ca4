from Crypto.Cipher import AES

KEY = b"0123456789abcdef"


def encrypt(block: bytes) -> bytes:
    cipher = AES.new(KEY, AES.MODE_ECB)
    return cipher.encrypt(block)
