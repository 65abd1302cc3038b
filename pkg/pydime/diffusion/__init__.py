from .schedule import *
from .model import *
from .training import *
from .sampling import *
from .checkpoint import *
