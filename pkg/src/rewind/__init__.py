"""Process supervisor that rolls a warm Linux guest back to a clean snapshot between requests.

A supervisor owns exactly one guest process. It attaches at spawn time, runs one
deployer-supplied dummy request to force lazy initialization, snapshots the quiescent
guest entirely in supervisor memory (layout, present page contents, registers of all
threads, brk), and after every served request rewinds the guest to that snapshot:
reversed layout changes via injected syscalls, dirtied pages rewritten from the
snapshot, registers reset. Rewinding happens off the request critical path; incoming
requests are buffered until the guest is clean again.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    AttachFailed,
    GuestDiverged,
    GuestError,
    KernelUnsupported,
    ModeUnsupported,
    ProcessGone,
    SpawnFailed,
)
from .manager import GuestState, RequestEnvelope, Supervisor  # noqa: F401
from .procfs import MemoryLayout, MemoryRegion, PageFlags, Perms, RegionKind  # noqa: F401
from .restore import RestoreReport  # noqa: F401
from .snapshot import Snapshot  # noqa: F401
from .tracking import DirtySet, LayoutDelta, diff_layout  # noqa: F401
