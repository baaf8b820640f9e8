#pragma once

// Durable file replacement and the single-writer session lock (POSIX).

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <csignal>
#include <cstdlib>
#include <string>
#include <string_view>

#include "mbcset/error.hpp"

namespace mbcset {

namespace detail {

// Test hook: MBCSET_FAULT=mid_write or before_rename kills the process at
// that point of an atomic write.
inline void maybe_inject_fault(std::string_view point) {
  const char* fault = std::getenv("MBCSET_FAULT");
  if (fault != nullptr && point == fault) ::raise(SIGKILL);
}

inline void write_all(int fd, std::string_view data, const std::string& path) {
  while (!data.empty()) {
    const ssize_t n = ::write(fd, data.data(), data.size());
    if (n < 0) throw SessionError("write failed for '" + path + "'");
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

inline std::string parent_dir(const std::string& path) {
  const auto slash = path.find_last_of('/');
  if (slash == std::string::npos) return ".";
  if (slash == 0) return "/";
  return path.substr(0, slash);
}

}  // namespace detail

/// Writes to a sibling temp file, fsyncs, then renames over `path`. Readers
/// see either the old or the new content, never a mix.
inline void atomic_write(const std::string& path, std::string_view data) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw SessionError("cannot create '" + tmp + "'");
  try {
    const std::size_t half = data.size() / 2;
    detail::write_all(fd, data.substr(0, half), tmp);
    detail::maybe_inject_fault("mid_write");
    detail::write_all(fd, data.substr(half), tmp);
    if (::fsync(fd) != 0) throw SessionError("fsync failed for '" + tmp + "'");
  } catch (...) {
    ::close(fd);
    ::unlink(tmp.c_str());
    throw;
  }
  ::close(fd);
  detail::maybe_inject_fault("before_rename");
  if (::rename(tmp.c_str(), path.c_str()) != 0) {
    ::unlink(tmp.c_str());
    throw SessionError("cannot replace '" + path + "'");
  }
  const int dir = ::open(detail::parent_dir(path).c_str(), O_RDONLY | O_DIRECTORY);
  if (dir >= 0) {
    ::fsync(dir);
    ::close(dir);
  }
}

/// Exclusive advisory lock on `<path>.lock`, released on destruction or when
/// the holder dies.
class FileLock {
 public:
  explicit FileLock(const std::string& path) : lock_path_(path + ".lock") {
    fd_ = ::open(lock_path_.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw SessionError("cannot open lock file '" + lock_path_ + "'");
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw SessionError("session '" + path + "' is locked by another writer");
    }
  }

  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

  ~FileLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }

 private:
  std::string lock_path_;
  int fd_ = -1;
};

}  // namespace mbcset
