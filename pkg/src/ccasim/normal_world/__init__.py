"""Untrusted actors and the shared-memory transports between them and an SBS."""
from .app import App
from .channel import SecureChannel, encrypted_channel, flip_bit
from .guest import PROGRAMS, GuestContext, build_program, hotp
from .hypervisor import Hypervisor, SbsRecord
from .transport import RpcFrame, Virtqueue, Descriptor, vq_pop, vq_push

__all__ = ["App", "SecureChannel", "encrypted_channel", "flip_bit", "PROGRAMS",
           "GuestContext", "build_program", "hotp", "Hypervisor", "SbsRecord",
           "RpcFrame", "Virtqueue", "Descriptor", "vq_pop", "vq_push"]
