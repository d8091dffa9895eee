'''lab_constants.py'''

from enum import Enum


'''
----------------------
General Lab Constants
----------------------
'''

class Operator(Enum):
  '''Operators an objective tree can use; protected ones are total on the reals'''
  def __init__(self, symbol: str, arity: int):
    self.__symbol = symbol
    self.__arity = arity

  @property
  def symbol(self): return self.__symbol
  @property
  def arity(self): return self.__arity

  ADD = ("+", 2)
  SUB = ("-", 2)
  MUL = ("*", 2)
  DIV = ("/", 2)    #a / (|b| + eps)
  SIN = ("sin", 1)
  COS = ("cos", 1)
  LOG = ("log", 1)  #log(|a| + eps)
  EXP = ("exp", 1)  #exp(min(a, 20))
  ABS = ("abs", 1)
  NEG = ("neg", 1)

  @classmethod
  def from_symbol(cls, symbol: str) -> "Operator":
    for op in cls:
      if op.symbol == symbol:
        return op
    raise KeyError(symbol)


OPERATOR_SYMBOLS = frozenset(op.symbol for op in Operator)


class AlgoFamily(Enum):
  '''Metaheuristic families; index is the slot in the one-hot feature block'''
  def __init__(self, family_name: str, index: int, population_based: bool):
    self.__family_name = family_name
    self.__index = index
    self.__population_based = population_based

  @property
  def family_name(self): return self.__family_name
  @property
  def index(self): return self.__index
  @property
  def population_based(self): return self.__population_based

  DE = ("DE", 0, True)
  PSO = ("PSO", 1, True)
  GA = ("GA", 2, True)
  SA = ("SA", 3, False)
  RANDOM_SEARCH = ("RandomSearch", 4, False)

  @classmethod
  def from_name(cls, name: str) -> "AlgoFamily":
    for fam in cls:
      if fam.family_name == name:
        return fam
    raise KeyError(name)


class ModelKind(Enum):
  '''The four selector families'''
  def __init__(self, kind_name: str, uses_algo_features: bool, pairwise: bool):
    self.__kind_name = kind_name
    self.__uses_algo_features = uses_algo_features
    self.__pairwise = pairwise

  @property
  def kind_name(self): return self.__kind_name
  @property
  def uses_algo_features(self): return self.__uses_algo_features
  @property
  def pairwise(self): return self.__pairwise

  MODEL_A = ("ModelA", True, True)
  MODEL_B = ("ModelB", True, True)
  MODEL_REG = ("ModelReg", False, False)
  MODEL_CLA = ("ModelCla", False, False)

  @classmethod
  def from_name(cls, name: str) -> "ModelKind":
    for kind in cls:
      if kind.kind_name == name:
        return kind
    raise KeyError(name)


class Scenario(Enum):
  PROBLEM_SCALE = "problem_scale"
  ALGO_SCALE = "algo_scale"
  DIST_SHIFT = "dist_shift"
  SCALE_UNDER_SHIFT = "scale_under_shift"
  MODEL_COMPLEXITY = "model_complexity"


class ShiftKind(Enum):
  NONE = "none"
  PROBLEM = "problem"
  ALGO = "algo"
  BOTH = "both"


class FrozenMeta(type):
  '''cannot edit lab constants check'''
  def __setattr__(cls, name, value):
    raise AttributeError(f"Cannot edit constants '{name}' in LabConstants")

class LabConstants(metaclass = FrozenMeta):
  TOOL_VERSION = "0.3.0"

  #expression evaluation protection
  EVAL_EPS = 1e-9
  EXP_CLIP = 20.0
  VALUE_CLAMP = 1e100

  #problem generation defaults
  DEFAULT_L_MAX = 32
  DEFAULT_DIM = 5
  DEFAULT_MAX_DEPTH = 5
  DEFAULT_LO = -5.0
  DEFAULT_HI = 5.0
  CONST_LO = -1.0
  CONST_HI = 1.0

  #portfolio defaults
  DEFAULT_POPULATION = 30
  DEFAULT_ITERATIONS = 200
  MAX_PORTFOLIO = 64
  FEATURE_LEN_G = 11

  #labeling
  DEFAULT_N_RUNS = 20

  #training (plain SGD)
  DEFAULT_LR = 0.05
  DEFAULT_EPOCHS = 300
  FULL_BATCH_LIMIT = 10000
  MINIBATCH = 256
  REFERENCE_WIDTH = 128
  REFERENCE_DEPTH = 3
  MIN_WIDTH_K = 0.25
  MAX_WIDTH_K = 2.0
  TARGET_CLIP = 3.0

  #bounds
  GAMMA_MARGIN = 0.1
  DELTA = 0.05
  GAMMA_BCE = 0.25
  GAMMA_SOFTMAX = 1.0

  #experiments
  DEFAULT_ETA = 0.25
  SHIFT_SCALE = 0.1
  DEFAULT_MC_DRAWS = 2000


'''
----------------------
Exceptions
----------------------
'''

class LabException(Exception):
  pass

class LabValidationException(LabException):
  '''bad input, config or precondition (cli exit code 1)'''
  pass

class LabRuntimeException(LabException):
  '''failure while computing (cli exit code 2)'''
  pass
