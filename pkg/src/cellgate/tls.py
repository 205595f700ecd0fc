"""Local certificate authority for TLS interception.

The proxy can only enforce per-action policies on HTTPS traffic it can
read. Operators generate a CA once, trust it in the agent's browser
profile, and the proxy mints short-lived per-host leaf certificates on the
fly during CONNECT handling. Leaves share one RSA key so a new host costs
one signature, not one key generation.
"""

from __future__ import annotations

import datetime
import ipaddress
import os
import ssl
import tempfile
import threading

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import rsa
from cryptography.x509.oid import NameOID

_CA_NAME = "cellgate interception CA"


def _new_key() -> rsa.RSAPrivateKey:
    return rsa.generate_private_key(public_exponent=65537, key_size=2048)


def _key_pem(key) -> bytes:
    return key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.TraditionalOpenSSL,
        serialization.NoEncryption(),
    )


class CertificateAuthority:
    def __init__(self, ca_cert: x509.Certificate, ca_key: rsa.RSAPrivateKey):
        self.ca_cert = ca_cert
        self.ca_key = ca_key
        self._leaf_key = _new_key()
        self._contexts: dict[str, ssl.SSLContext] = {}
        self._lock = threading.Lock()

    @classmethod
    def generate(cls) -> "CertificateAuthority":
        key = _new_key()
        name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, _CA_NAME)])
        now = datetime.datetime.now(datetime.timezone.utc)
        cert = (
            x509.CertificateBuilder()
            .subject_name(name)
            .issuer_name(name)
            .public_key(key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=3650))
            .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
            .add_extension(
                x509.KeyUsage(
                    digital_signature=True, key_cert_sign=True, crl_sign=True,
                    content_commitment=False, key_encipherment=False,
                    data_encipherment=False, key_agreement=False,
                    encipher_only=False, decipher_only=False,
                ),
                critical=True,
            )
            .sign(key, hashes.SHA256())
        )
        return cls(cert, key)

    @classmethod
    def load(cls, cert_path: str, key_path: str) -> "CertificateAuthority":
        with open(cert_path, "rb") as fh:
            cert = x509.load_pem_x509_certificate(fh.read())
        with open(key_path, "rb") as fh:
            key = serialization.load_pem_private_key(fh.read(), password=None)
        return cls(cert, key)

    @classmethod
    def load_or_create(cls, directory: str) -> "CertificateAuthority":
        cert_path = os.path.join(directory, "ca.pem")
        key_path = os.path.join(directory, "ca.key")
        if os.path.exists(cert_path) and os.path.exists(key_path):
            return cls.load(cert_path, key_path)
        os.makedirs(directory, exist_ok=True)
        ca = cls.generate()
        ca.save(directory)
        return ca

    def save(self, directory: str) -> tuple[str, str]:
        cert_path = os.path.join(directory, "ca.pem")
        key_path = os.path.join(directory, "ca.key")
        with open(cert_path, "wb") as fh:
            fh.write(self.cert_pem())
        with open(key_path, "wb") as fh:
            fh.write(_key_pem(self.ca_key))
        os.chmod(key_path, 0o600)
        return cert_path, key_path

    def cert_pem(self) -> bytes:
        return self.ca_cert.public_bytes(serialization.Encoding.PEM)

    def _issue_leaf(self, host: str) -> bytes:
        try:
            san: x509.GeneralName = x509.IPAddress(ipaddress.ip_address(host))
        except ValueError:
            san = x509.DNSName(host)
        now = datetime.datetime.now(datetime.timezone.utc)
        cert = (
            x509.CertificateBuilder()
            .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, host)]))
            .issuer_name(self.ca_cert.subject)
            .public_key(self._leaf_key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now - datetime.timedelta(minutes=5))
            .not_valid_after(now + datetime.timedelta(days=30))
            .add_extension(x509.SubjectAlternativeName([san]), critical=False)
            .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
            .sign(self.ca_key, hashes.SHA256())
        )
        return cert.public_bytes(serialization.Encoding.PEM)

    def server_context(self, host: str) -> ssl.SSLContext:
        """TLS server context presenting a CA-signed certificate for host."""
        with self._lock:
            ctx = self._contexts.get(host)
            if ctx is not None:
                return ctx
            leaf_pem = self._issue_leaf(host)
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            # load_cert_chain only reads files, so stage the PEMs briefly
            with tempfile.TemporaryDirectory() as tmp:
                cert_file = os.path.join(tmp, "leaf.pem")
                with open(cert_file, "wb") as fh:
                    fh.write(leaf_pem)
                    fh.write(self.cert_pem())
                key_file = os.path.join(tmp, "leaf.key")
                with open(key_file, "wb") as fh:
                    fh.write(_key_pem(self._leaf_key))
                ctx.load_cert_chain(cert_file, key_file)
            self._contexts[host] = ctx
            return ctx
