from .task import *
from .score import *
