import os
import subprocess
import sys
import time

import pytest
from hypothesis import given, settings, strategies as st

from smcgate.crypto import (
    CertificateError,
    DecryptionError,
    Identity,
    decrypt,
    encrypt_for,
    fingerprint,
    generate_identity,
    load_certificate,
    sign,
    verify,
    verify_certificate,
)

NOW = int(time.time())


def test_anchor_verifies_itself(anchor):
    assert verify_certificate(anchor.certificate, [anchor.certificate], NOW)


def test_entity_verifies_under_anchor(anchor, client_identity):
    assert verify_certificate(client_identity.certificate, [anchor.certificate], NOW)


def test_entity_rejected_under_unrelated_anchor(client_identity):
    other = generate_identity("other-anchor")
    assert not verify_certificate(client_identity.certificate, [other.certificate], NOW)


def test_expired_certificate_rejected(anchor):
    old = generate_identity("old", "p", issuer=anchor, not_before=NOW - 7200, not_after=NOW - 3600)
    assert not verify_certificate(old.certificate, [anchor.certificate], NOW)


def test_chain_depth_limited(anchor, client_identity):
    with pytest.raises(CertificateError):
        generate_identity("grandchild", "p", issuer=client_identity)


def test_invalid_validity_window():
    with pytest.raises(CertificateError):
        generate_identity("x", not_before=100, not_after=100)


def test_sign_verify_roundtrip(client_identity):
    m = b"message"
    s = sign(client_identity.signing_key, m)
    assert verify(s, client_identity.certificate, m)
    assert not verify(s, client_identity.certificate, bytes([m[0] ^ 1]) + m[1:])


def test_wrong_key(anchor, client_identity):
    s = anchor.sign(b"m")
    assert not verify(s, client_identity.certificate, b"m")


@pytest.mark.parametrize("bad", [b"", b"\x00" * 3, b"\x00" * 64, b"\xff" * 100])
def test_malformed_signature_is_false(client_identity, bad):
    assert verify(bad, client_identity.certificate, b"m") is False


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=512), st.integers(min_value=0), st.integers(min_value=0, max_value=7))
def test_signature_bitflips_fail(client_identity, message, pos, bit):
    sig = client_identity.sign(message)
    assert verify(sig, client_identity.certificate, message)
    flipped_sig = bytearray(sig)
    flipped_sig[pos % len(sig)] ^= 1 << bit
    assert not verify(bytes(flipped_sig), client_identity.certificate, message)
    if message:
        flipped = bytearray(message)
        flipped[pos % len(message)] ^= 1 << bit
        assert not verify(sig, client_identity.certificate, bytes(flipped))


def test_encrypt_roundtrip_and_holder_only(anchor, client_identity):
    gateway = generate_identity("gateway", issuer=anchor)
    ct = encrypt_for(client_identity.certificate, b"42")
    assert decrypt(client_identity.decryption_key, ct) == b"42"
    with pytest.raises(DecryptionError):
        decrypt(gateway.decryption_key, ct)


def test_tampered_ciphertext_detected(client_identity):
    ct = bytearray(encrypt_for(client_identity.certificate, b"42"))
    ct[-1] ^= 0x01
    with pytest.raises(DecryptionError):
        client_identity.decrypt(bytes(ct))


@pytest.mark.parametrize("size", [0, 1, 1000, 1 << 20])
def test_large_payload_roundtrip_and_corruption(client_identity, size):
    payload = os.urandom(size)
    ct = encrypt_for(client_identity.certificate, payload)
    assert client_identity.decrypt(ct) == payload
    for pos in (0, 40, len(ct) // 2, len(ct) - 1):
        bad = bytearray(ct)
        bad[pos] ^= 0x80
        with pytest.raises(DecryptionError):
            client_identity.decrypt(bytes(bad))


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=4096), st.integers(min_value=0), st.integers(min_value=1, max_value=255))
def test_any_single_byte_corruption_fails(client_identity, payload, pos, delta):
    ct = bytearray(encrypt_for(client_identity.certificate, payload))
    ct[pos % len(ct)] ^= delta
    with pytest.raises(DecryptionError):
        client_identity.decrypt(bytes(ct))


def test_identity_files_roundtrip(tmp_path, anchor, client_identity):
    cert_path, key_path = client_identity.save(tmp_path, "client")
    assert oct(key_path.stat().st_mode & 0o777) == "0o600"
    loaded = Identity.load(cert_path, key_path)
    assert loaded.certificate == client_identity.certificate
    assert loaded.fingerprint == client_identity.fingerprint
    assert verify(loaded.sign(b"x"), client_identity.certificate, b"x")


def test_fingerprint_stable_across_processes(tmp_path, client_identity):
    cert_path, _ = client_identity.save(tmp_path, "c")
    code = f"from smcgate.crypto import load_certificate; print(load_certificate({str(cert_path)!r}).fingerprint)"
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.strip()
    assert out == fingerprint(load_certificate(cert_path)) == client_identity.fingerprint
    assert len(bytes.fromhex(out)) == 32
