# CHE Toolkit - Core Package
