"""@ingroup pyeegmae
@file
An injectable abstraction for common os operations.
"""
import os
import time

class System(object):
    """An injectable abstraction of system-level operations required by the training and benchmark drivers.

    This includes actions such as reading files, creating output directories, reading the clock, etc.
    Tests substitute a fake so that no real files or timers are needed.
    """
    #pylint: disable=no-self-use
    def is_directory(self, path):
        """Returns whether the provided path is an existing directory on the underlying system.

        @param path The path of the directory to look for.
        @returns A boolean.
        """
        return os.path.isdir(path)

    def create_directory(self, path, mode=0o755):
        """Creates a directory (and any missing parents) on the underlying system.

        Existing directories are left untouched.

        @param path The path to the directory that should be created.
        @param mode The permission level that should be applied to the newly created directory.
        """
        os.makedirs(path, mode=mode, exist_ok=True)

    def is_file(self, path):
        """Returns whether the provided path is an existing file on the underlying system.

        @param path The path of the file to look for.
        @returns A boolean.
        """
        return os.path.isfile(path)

    def read_text(self, path):
        """Reads the contents of a text file.

        @param path The path to the file that should be read.
        @returns A string.
        """
        with open(path, 'r') as the_file:
            return the_file.read()

    def read_bytes(self, path):
        """Reads the contents of a binary file.

        @param path The path to the file that should be read.
        @returns A bytes object.
        """
        with open(path, 'rb') as the_file:
            return the_file.read()

    def write_bytes(self, path, contents):
        """Creates (or replaces) a binary file with the specified contents.

        @param path The path to the file that should be written.
        @param contents A bytes object.
        """
        with open(path, 'wb') as new_file:
            new_file.write(contents)

    def open_text(self, path, mode='w'):
        """Opens a text file for streaming writes.

        @param path The path to the file.
        @param mode The open mode, 'w' or 'a'.
        @returns A file object; the caller closes it.
        """
        return open(path, mode, newline='')

    def join(self, path, *paths):
        """Joins path components together to create a single path.

        @param path The base path.
        @param paths Path components to be appended to @p path.
        @returns A string.
        """
        return os.path.join(path, *paths)

    def get_environment_variable(self, key, default=None):
        """Retrieves the value of an environment variable from the current running environment.

        @param key The name of the variable to retrieve.
        @param default Optionally, the default value to be returned if @p key is unset.
        @returns A string.
        """
        return os.getenv(key, default=default)

    def monotonic_ns(self):
        """Reads the monotonic high-resolution clock.

        @returns An integer count of nanoseconds.
        """
        return time.perf_counter_ns()

    def cpu_busy_fraction(self):
        """Estimates how busy the machine is from the one-minute load average.

        @returns A float, the load average divided by the cpu count, or None where load averages are unavailable.
        """
        try:
            load = os.getloadavg()[0]
        except (AttributeError, OSError):
            return None
        return load / float(os.cpu_count() or 1)
