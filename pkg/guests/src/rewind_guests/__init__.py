"""Out-of-tree guests for the supervisor's line protocol.

Two guests live here: a native C microbenchmark (``c/microbench.c``, built
with any C compiler) and a managed-runtime function runner (`runner`) that
imports a user function once and serves requests to it in a loop.
"""
