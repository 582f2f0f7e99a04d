#pragma once

#include <stdexcept>
#include <string>

namespace dmd {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DecodeError : public Error { public: using Error::Error; };
class EncodeError : public Error { public: using Error::Error; };
class SizeError : public Error { public: using Error::Error; };
class DegenerateBoxError : public Error { public: using Error::Error; };
class BoundsError : public Error { public: using Error::Error; };
class ShapeMismatchError : public Error { public: using Error::Error; };

class EmptyDatasetError : public Error { public: using Error::Error; };
class OverlapError : public Error { public: using Error::Error; };
class DataError : public Error { public: using Error::Error; };

class StageError : public Error { public: using Error::Error; };
class IllegalTransitionError : public Error { public: using Error::Error; };
class IdentityCollisionError : public Error { public: using Error::Error; };
class TooManyRefsError : public Error { public: using Error::Error; };
class EmptyDictionaryError : public Error { public: using Error::Error; };
class MissingDictionaryError : public Error { public: using Error::Error; };

class VersionError : public Error { public: using Error::Error; };
class ChecksumError : public Error { public: using Error::Error; };

class DivergenceError : public Error { public: using Error::Error; };
class UnknownVariantError : public Error { public: using Error::Error; };
class UsageError : public Error { public: using Error::Error; };

}  // namespace dmd
