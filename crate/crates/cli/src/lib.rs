//! Library surface of the batch CLI (stub while the core builds out).
