"""Out-of-process inference sidecar for the retouch wire protocol.

Echo mode answers with deterministic analytic stand-ins and is
byte-compatible with the client's in-process mocks; real mode loads
pretrained models named in the config and refuses the handshake when a
model cannot be loaded.
"""

__version__ = "0.1.0"

from .config import ServerConfig
from .server import Dispatcher, SidecarServer, handle_payload, serve_stdio

__all__ = ["ServerConfig", "Dispatcher", "SidecarServer", "handle_payload", "serve_stdio"]
