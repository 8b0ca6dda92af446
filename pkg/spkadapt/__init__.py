#   Copyright 2024 The spkadapt Authors
#   Licensed under the Apache License, Version 2.0 (the "License");
#   you may not use this file except in compliance with the License.
#   You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#   Unless required by applicable law or agreed to in writing, software
#   distributed under the License is distributed on an "AS IS" BASIS,
#   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#   See the License for the specific language governing permissions and
#   limitations under the License.

import os.path as path
import sys
import warnings

import pandas as pd

# spkadapt base path
SPKADAPT_BASE_DIR = path.abspath(path.dirname(__file__))

from spkadapt.exceptions import SpkadaptError, SpkadaptWarning
# Load the version submodule now so a later `from spkadapt.version import ...` can't rebind spkadapt.version()
import spkadapt.version as _version_module

# Model imports; importing a model module registers its container kind
from spkadapt.features.transforms import LdaTransform
from spkadapt.models.acoustic import BlstmAcousticModel
from spkadapt.models.gmm import DiagonalGmm, VadModel
from spkadapt.models.ivector import RgTransform, TotalVariabilityModel
from spkadapt.models.model import Model
from spkadapt.tools.container_tools import load_model, save_model


#### Create custom exception and warning hooks to simplify error messages for new users
def _exception_handler(exception_type, exception, traceback, default_hook=sys.excepthook):
    """Catch spkadapt-generated exceptions, and make them prettier."""
    if issubclass(type(exception), SpkadaptError):
        print(f"spkadapt error: {str(exception)} ({traceback.tb_frame.f_code.co_filename}, line {traceback.tb_lineno})", file=sys.stderr)
    else:
        default_hook(exception_type, exception, traceback)

def _warning_displayer(message, category, filename, lineno, file=None, line=None, default_displayer=warnings.showwarning):
    """Catch spkadapt-generated warnings and make them prettier."""
    if issubclass(category, SpkadaptWarning):
        print(f"spkadapt warning: {str(message)} ({filename}, line {lineno})", file=sys.stderr)
    else:
        default_displayer(message, category, filename, lineno, file, line)

sys.excepthook = _exception_handler
warnings.showwarning = _warning_displayer
warnings.simplefilter("always", category=SpkadaptWarning)


def list_model_kinds():
    """List every model kind a container can hold, with the class that loads it."""
    kinds = Model.known_kinds()
    df = pd.DataFrame({"Class": [Model.class_for_kind(kind).__name__ for kind in kinds]}, index=pd.Index(kinds, name="Kind"))
    df.columns.name = "Name"
    return df

def version():
    """Return version number of spkadapt package."""
    version = {}
    version_path = path.join(SPKADAPT_BASE_DIR, "version.py")
    with open(version_path) as fp:
        exec(fp.read(), version)
    return version['__version__']
