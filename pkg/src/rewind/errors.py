"""Error taxonomy shared across the supervisor stack."""


class SupervisorError(RuntimeError):
    """Base class for everything this package raises on purpose."""


class ProcessGone(SupervisorError):
    """The guest (or one of its threads) vanished mid-operation (ESRCH)."""


class ParseError(SupervisorError):
    """A /proc file did not parse the way the kernel documents it."""


class ShortRead(SupervisorError):
    """A /proc read returned fewer records than the region implies; re-read the layout."""


class PartialTransfer(SupervisorError):
    """Memory I/O stopped at a hole. ``offset`` is how many bytes made it."""

    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class NotStopped(SupervisorError):
    """Register access attempted on a thread that is not ptrace-stopped."""


class KernelUnsupported(SupervisorError):
    """No usable dirty-tracking facility on this kernel; fatal at startup."""


class GadgetNotFound(SupervisorError):
    """No executable syscall instruction locatable in the guest."""


class SyscallFailed(SupervisorError):
    """An injected syscall returned a value its success predicate rejects."""

    def __init__(self, message: str, retval: int):
        super().__init__(message)
        self.retval = retval


class AddressCollision(SupervisorError):
    """The kernel placed a fixed remap somewhere else than requested."""


class GuestDiverged(SupervisorError):
    """The guest changed in a way rollback cannot undo; the container is dead."""


class SharedWritableMapping(SupervisorError):
    """Snapshot policy violation: a writable MAP_SHARED region is present."""


class OutOfMemory(SupervisorError):
    """Snapshot would exceed the configured memory cap."""


class SpawnFailed(SupervisorError):
    """Guest command could not be started."""


class AttachFailed(SupervisorError):
    """Guest started but ptrace attach failed."""


class GuestError(SupervisorError):
    """The guest violated the request/response protocol."""


class ModeUnsupported(SupervisorError):
    """The chosen mode cannot serve this guest (e.g. fork with threads)."""


class QueueOverflow(SupervisorError):
    """Request queue hit --max-queue; the request is rejected, not the guest."""


class RequestTimeout(SupervisorError):
    """The guest did not produce a response line within --timeout-s."""


class ConfigError(SupervisorError):
    """Bad CLI flags or option combination (exit code 4)."""
