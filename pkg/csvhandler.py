import logging
import os

import pandas as pd

from errors import IoFailure

FLOAT_FORMAT = "%.12g"


class CSVHandler:
    """Class to handle the CSV exports (training history, benchmark summaries, similarity maps)."""

    def __init__(self, file_path: str, delimiter: str = ",") -> None:
        """
        Initialize the CSVHandler.

        Args:
            file_path (str): Path to the CSV file.
            delimiter (str): Delimiter used in the CSV file.
        """
        assert isinstance(file_path, str), "file_path must be a string."
        assert isinstance(delimiter, str), "delimiter must be a string."

        self.file_path = file_path
        self.delimiter = delimiter
        self.dataframe = None
        self.logger = logging.getLogger(__name__)

    def read_csv(self) -> pd.DataFrame:
        """
        Read the CSV file with the specified delimiter.

        Returns:
            DataFrame: DataFrame containing the CSV data.

        Raises:
            IoFailure: If the file cannot be read.
        """
        try:
            self.dataframe = pd.read_csv(self.file_path, sep=self.delimiter)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            self.logger.error(f"Error reading CSV file: {e}")
            raise IoFailure(f"cannot read {self.file_path}: {e}") from e
        self.logger.info(f"Successfully read CSV file: {self.file_path}")
        return self.dataframe

    def save_csv(self, df: pd.DataFrame, index: bool = False) -> None:
        """
        Save a DataFrame to the CSV file with the specified delimiter.

        Args:
            df (DataFrame): DataFrame to save.
            index (bool): Boolean flag to include index in CSV. Default is False.

        Raises:
            IoFailure: If the file cannot be written.
        """
        assert isinstance(df, pd.DataFrame), "df must be a DataFrame."
        assert isinstance(index, bool), "index must be a boolean."

        directory = os.path.dirname(self.file_path)
        try:
            if directory:
                os.makedirs(directory, exist_ok=True)
            with open(self.file_path, "w", encoding="utf-8", newline="") as f:
                f.write(render_csv(df, self.delimiter, index))
        except OSError as e:
            self.logger.error(f"Error saving CSV file: {e}")
            raise IoFailure(f"cannot write {self.file_path}: {e}") from e
        self.dataframe = df
        self.logger.info(f"Successfully saved DataFrame to CSV file: {self.file_path}")

    def get_dataframe(self) -> pd.DataFrame:
        """
        Get the DataFrame of the CSV data.

        Returns:
            DataFrame: DataFrame containing the CSV data.
        """
        return self.dataframe


def render_csv(df: pd.DataFrame, delimiter: str = ",", index: bool = False) -> str:
    """Render a DataFrame as CSV text with a fixed float format and "\\n" line endings."""
    return df.to_csv(sep=delimiter, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")
