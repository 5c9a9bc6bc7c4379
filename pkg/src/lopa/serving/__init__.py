"""Client-computed-prefix serving.

``wire`` and ``server`` never import composer code; ``client`` does.  Keep
this package ``__init__`` free of imports so loading the server pulls in
nothing from the client side.
"""
