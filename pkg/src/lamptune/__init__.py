"""Low-parameter prompt tuning on a frozen toy transformer.

Subpackages:

- ``engine``: float64 reverse-mode autodiff on matrices and stacks
- ``svd``: one-sided Jacobi singular value decomposition
- ``prompt``: prompt decomposition, reconstruction, pooling, checkpoints
- ``backbone``: small frozen pre-norm transformer encoder
- ``trainer``: AdamW training loop, synthetic tasks, gradient checking
- ``analysis``: parameter/cost accounting and embedding export
- ``cli``: the ``lamptune`` command line tool
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
