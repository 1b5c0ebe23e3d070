"""Node mesh: framed links, announcement flooding, routing, RPC and transfers."""
