from cryptography.fernet import Fernet

def box():
    return Fernet(Fernet.generate_key())
