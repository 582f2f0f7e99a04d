#include "dmd/errors.hpp"
