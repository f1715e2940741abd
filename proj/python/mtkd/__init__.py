from ._mtkd import *  # noqa: F401,F403
from ._mtkd import __doc__  # noqa: F401
