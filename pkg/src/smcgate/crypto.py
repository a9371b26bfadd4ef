"""Identities, certificates, signatures and result encryption.

Signatures are Ed25519 over canonical bytes. Results are sealed with an
ephemeral X25519 key agreement, HKDF-SHA256 and ChaCha20-Poly1305, so only
the holder of the recipient certificate's encryption key can open them and
any modification is detected.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .canonical import canonical_serialize

DEFAULT_CERT_LIFETIME = 365 * 24 * 3600
_HKDF_INFO = b"smcgate/result-seal/v1"


class CertificateError(ValueError):
    pass


class DecryptionError(Exception):
    """Authenticated decryption failed: wrong key or tampered ciphertext."""


def _raw_public(key) -> bytes:
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


def _raw_private(key) -> bytes:
    return key.private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw, serialization.NoEncryption()
    )


@dataclass(frozen=True)
class Certificate:
    subject: str
    purpose: str
    public_key: bytes
    enc_key: bytes
    issuer_fpr: str | None
    not_before: int
    not_after: int
    sig: bytes = b""

    def signing_payload(self) -> dict:
        return {
            "subject": self.subject,
            "purpose": self.purpose,
            "public_key": self.public_key.hex(),
            "enc_key": self.enc_key.hex(),
            "issuer_fpr": self.issuer_fpr,
            "not_before": self.not_before,
            "not_after": self.not_after,
        }

    def to_dict(self) -> dict:
        d = self.signing_payload()
        d["sig"] = self.sig.hex()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        try:
            return cls(
                subject=str(d["subject"]),
                purpose=str(d["purpose"]),
                public_key=bytes.fromhex(d["public_key"]),
                enc_key=bytes.fromhex(d["enc_key"]),
                issuer_fpr=d["issuer_fpr"],
                not_before=int(d["not_before"]),
                not_after=int(d["not_after"]),
                sig=bytes.fromhex(d["sig"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CertificateError(f"malformed certificate: {exc}") from exc

    @property
    def fingerprint(self) -> str:
        return fingerprint(self)

    @property
    def self_signed(self) -> bool:
        return self.issuer_fpr is None

    def valid_at(self, now: int) -> bool:
        return self.not_before <= now <= self.not_after


def fingerprint(cert: Certificate) -> str:
    """SHA-256 over the full canonical certificate, hex encoded."""
    return hashlib.sha256(canonical_serialize(cert.to_dict())).hexdigest()


@dataclass(frozen=True)
class Identity:
    certificate: Certificate
    signing_key: Ed25519PrivateKey = field(repr=False)
    decryption_key: X25519PrivateKey = field(repr=False)

    @property
    def fingerprint(self) -> str:
        return self.certificate.fingerprint

    def sign(self, message: bytes) -> bytes:
        return sign(self.signing_key, message)

    def decrypt(self, ciphertext: bytes) -> bytes:
        return decrypt(self.decryption_key, ciphertext)

    def save(self, directory: str | os.PathLike, name: str) -> tuple[Path, Path]:
        """Write ``<name>.cert.json`` (public) and ``<name>.key.json`` (mode 0600)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cert_path = directory / f"{name}.cert.json"
        key_path = directory / f"{name}.key.json"
        save_certificate(self.certificate, cert_path)
        keys = {
            "signing_key": _raw_private(self.signing_key).hex(),
            "decryption_key": _raw_private(self.decryption_key).hex(),
        }
        fd = os.open(key_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "wb") as fh:
            fh.write(canonical_serialize(keys))
        return cert_path, key_path

    @classmethod
    def load(cls, cert_path: str | os.PathLike, key_path: str | os.PathLike) -> "Identity":
        cert = load_certificate(cert_path)
        keys = json.loads(Path(key_path).read_text())
        signing_key = Ed25519PrivateKey.from_private_bytes(bytes.fromhex(keys["signing_key"]))
        decryption_key = X25519PrivateKey.from_private_bytes(bytes.fromhex(keys["decryption_key"]))
        if _raw_public(signing_key.public_key()) != cert.public_key:
            raise CertificateError(f"{key_path} does not match {cert_path}")
        return cls(cert, signing_key, decryption_key)


def save_certificate(cert: Certificate, path: str | os.PathLike) -> None:
    Path(path).write_bytes(canonical_serialize(cert.to_dict()))


def load_certificate(path: str | os.PathLike) -> Certificate:
    return Certificate.from_dict(json.loads(Path(path).read_text()))


def generate_identity(
    subject: str,
    purpose: str = "",
    issuer: Identity | None = None,
    not_before: int | None = None,
    not_after: int | None = None,
) -> Identity:
    """Create a key pair and a certificate for it.

    With ``issuer=None`` the certificate is self-signed and is meant to be
    configured as a trust anchor. Otherwise the issuer signs it, which gives
    the only chain shape accepted here: anchor -> entity.
    """
    if not subject:
        raise CertificateError("subject must be non-empty")
    if not_before is None:
        not_before = int(time.time()) - 60
    if not_after is None:
        not_after = not_before + DEFAULT_CERT_LIFETIME
    if not_before >= not_after:
        raise CertificateError(f"invalid validity window [{not_before}, {not_after}]")
    if issuer is not None and not issuer.certificate.self_signed:
        raise CertificateError("issuer must be a self-signed trust anchor (chain depth <= 2)")

    signing_key = Ed25519PrivateKey.generate()
    decryption_key = X25519PrivateKey.generate()
    unsigned = Certificate(
        subject=subject,
        purpose=purpose,
        public_key=_raw_public(signing_key.public_key()),
        enc_key=_raw_public(decryption_key.public_key()),
        issuer_fpr=None if issuer is None else issuer.fingerprint,
        not_before=not_before,
        not_after=not_after,
    )
    signer = signing_key if issuer is None else issuer.signing_key
    cert = replace(unsigned, sig=sign(signer, canonical_serialize(unsigned.signing_payload())))
    return Identity(cert, signing_key, decryption_key)


def sign(key: Ed25519PrivateKey, message: bytes) -> bytes:
    return key.sign(message)


def verify(sig: bytes, cert: Certificate, message: bytes) -> bool:
    """True iff ``sig`` is a signature by ``cert``'s key over exactly ``message``.

    Malformed key or signature bytes yield False rather than an exception.
    """
    try:
        Ed25519PublicKey.from_public_bytes(cert.public_key).verify(bytes(sig), message)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def verify_certificate(cert: Certificate, anchors: Iterable[Certificate], now: int | None = None) -> bool:
    """Check ``cert`` against the configured trust anchors at time ``now``.

    Accepts either an anchor itself or a certificate issued directly by one.
    """
    if now is None:
        now = int(time.time())
    by_fpr = {a.fingerprint: a for a in anchors}
    if not cert.valid_at(now):
        return False
    fpr = cert.fingerprint
    payload = canonical_serialize(cert.signing_payload())
    if fpr in by_fpr:
        return cert.self_signed and verify(cert.sig, cert, payload)
    issuer = by_fpr.get(cert.issuer_fpr) if cert.issuer_fpr else None
    if issuer is None or not issuer.valid_at(now):
        return False
    return verify(cert.sig, issuer, payload)


def encrypt_for(cert: Certificate, plaintext: bytes) -> bytes:
    """Seal ``plaintext`` for the holder of ``cert``.

    Layout: ephemeral public key (32) || nonce (12) || AEAD ciphertext.
    """
    ephemeral = X25519PrivateKey.generate()
    eph_pub = _raw_public(ephemeral.public_key())
    shared = ephemeral.exchange(X25519PublicKey.from_public_bytes(cert.enc_key))
    key = _derive(shared, eph_pub, cert.enc_key)
    nonce = os.urandom(12)
    return eph_pub + nonce + ChaCha20Poly1305(key).encrypt(nonce, plaintext, eph_pub)


def decrypt(key: X25519PrivateKey | Identity, ciphertext: bytes) -> bytes:
    if isinstance(key, Identity):
        key = key.decryption_key
    if len(ciphertext) < 32 + 12 + 16:
        raise DecryptionError("ciphertext too short")
    eph_pub, nonce, body = ciphertext[:32], ciphertext[32:44], ciphertext[44:]
    own_pub = _raw_public(key.public_key())
    try:
        shared = key.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        return ChaCha20Poly1305(_derive(shared, eph_pub, own_pub)).decrypt(nonce, body, eph_pub)
    except (InvalidTag, ValueError) as exc:
        raise DecryptionError("authenticated decryption failed") from exc


def _derive(shared: bytes, eph_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=_HKDF_INFO + eph_pub + recipient_pub).derive(
        shared
    )
